use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::ToolError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub timeout_ms: u64,
    /// Retries after the first attempt.
    pub max_retries: u32,
    /// First backoff delay; doubles on every retry.
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            timeout_ms: 60_000,
            max_retries: 3,
            backoff_ms: 500,
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, retry: u32) -> Duration {
        Duration::from_millis(self.backoff_ms.saturating_mul(1u64 << retry.min(16)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

impl HttpResponse {
    fn is_transient(&self) -> bool {
        self.status >= 500 || self.status == 429 || self.status == 408
    }
}

pub trait Transport: Send + Sync {
    /// POSTs a JSON body. `Err` means the request never produced a response.
    fn post_json(
        &self,
        url: &str,
        body: &Value,
        headers: &[(String, String)],
        timeout: Duration,
    ) -> Result<HttpResponse, String>;
}

/// Blocking transport over `ureq`.
#[derive(Debug, Default)]
pub struct UreqTransport;

impl Transport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        body: &Value,
        headers: &[(String, String)],
        timeout: Duration,
    ) -> Result<HttpResponse, String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut request = agent.post(url);
        for (k, v) in headers {
            request = request.header(k.as_str(), v.as_str());
        }
        let mut response = request.send_json(body).map_err(|e| e.to_string())?;
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| e.to_string())?;
        Ok(HttpResponse { status, body })
    }
}

/// Counting semaphore bounding in-flight tool calls.
#[derive(Debug)]
pub struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Semaphore {
            permits: Mutex::new(permits.max(1)),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().unwrap();
        while *n == 0 {
            n = self.freed.wait(n).unwrap();
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CallOutcome {
    pub body: Value,
    pub attempts: u32,
}

/// POSTs `payload` to `endpoint`, retrying transient failures with
/// exponential backoff. Non-transient HTTP errors fail immediately.
pub fn http_call(
    transport: &dyn Transport,
    tool: &str,
    endpoint: &str,
    payload: &Value,
    headers: &[(String, String)],
    policy: &RetryPolicy,
) -> Result<CallOutcome, ToolError> {
    let timeout = Duration::from_millis(policy.timeout_ms);
    let mut attempts = 0;
    loop {
        attempts += 1;
        let cause = match transport.post_json(endpoint, payload, headers, timeout) {
            Ok(resp) if (200..300).contains(&resp.status) => {
                return serde_json::from_str(&resp.body)
                    .map(|body| CallOutcome { body, attempts })
                    .map_err(|e| ToolError::ToolFailure {
                        tool: tool.to_string(),
                        cause: format!("invalid JSON response: {e}"),
                        attempts,
                    });
            }
            Ok(resp) if !resp.is_transient() => {
                return Err(ToolError::ToolFailure {
                    tool: tool.to_string(),
                    cause: format!("HTTP {}: {}", resp.status, resp.body),
                    attempts,
                });
            }
            Ok(resp) => format!("HTTP {}", resp.status),
            Err(e) => e,
        };
        if attempts > policy.max_retries {
            return Err(ToolError::ToolFailure {
                tool: tool.to_string(),
                cause,
                attempts,
            });
        }
        log::warn!("{tool}: attempt {attempts} to {endpoint} failed ({cause}), retrying");
        std::thread::sleep(policy.backoff(attempts - 1));
    }
}

/// A transport plus retry policy, credentials and a concurrency bound.
pub struct HttpClient {
    transport: Box<dyn Transport>,
    policy: RetryPolicy,
    headers: Vec<(String, String)>,
    limit: Semaphore,
}

impl HttpClient {
    pub fn new(transport: Box<dyn Transport>, policy: RetryPolicy, concurrency: usize) -> Self {
        HttpClient {
            transport,
            policy,
            headers: Vec::new(),
            limit: Semaphore::new(concurrency),
        }
    }

    /// Sends `Authorization: Bearer <token>` on every request.
    pub fn with_bearer(mut self, token: &str) -> Self {
        self.headers
            .push(("Authorization".to_string(), format!("Bearer {token}")));
        self
    }

    pub fn call(&self, tool: &str, endpoint: &str, payload: &Value) -> Result<CallOutcome, ToolError> {
        let _permit = self.limit.acquire();
        http_call(
            self.transport.as_ref(),
            tool,
            endpoint,
            payload,
            &self.headers,
            &self.policy,
        )
    }
}
