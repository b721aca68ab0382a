//! Outbound HTTP for inferlets: allowlist, fixture transport for simulated
//! time, and a real transport on worker threads.

use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::control::Resolver;
use crate::error::{ApiError, ApiResult};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpResponse {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

/// Canned response served by the fixture transport after `latency_us`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fixture {
    pub response: HttpResponse,
    pub latency_us: u64,
}

impl Fixture {
    pub fn ok(body: impl Into<Vec<u8>>, latency_us: u64) -> Self {
        Fixture {
            response: HttpResponse { status: 200, headers: Vec::new(), body: body.into() },
            latency_us,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Get,
    Post,
}

/// Returns the `host[:port]` of an http(s) URL.
pub fn authority_of(url: &str) -> ApiResult<(String, Option<u16>)> {
    let uri: ureq::http::Uri = url.parse().map_err(|_| ApiError::InvalidArgument(format!("bad url `{url}`")))?;
    match uri.scheme_str() {
        Some("http") | Some("https") => {}
        _ => return Err(ApiError::InvalidArgument(format!("unsupported scheme in `{url}`"))),
    }
    let host = uri.host().ok_or_else(|| ApiError::InvalidArgument(format!("no host in `{url}`")))?;
    Ok((host.to_ascii_lowercase(), uri.port_u16()))
}

/// Allowlist entries are `*`, `host`, `host:port` or `*.suffix`.
pub fn allowed(allowlist: &[String], url: &str) -> ApiResult<()> {
    let (host, port) = authority_of(url)?;
    let ok = allowlist.iter().any(|entry| {
        let entry = entry.to_ascii_lowercase();
        if entry == "*" {
            return true;
        }
        if let Some(suffix) = entry.strip_prefix("*.") {
            return host.ends_with(&format!(".{suffix}"));
        }
        match entry.rsplit_once(':') {
            Some((h, p)) if p.parse::<u16>().is_ok() => h == host && port == p.parse().ok(),
            _ => entry == host,
        }
    });
    if ok {
        Ok(())
    } else {
        Err(ApiError::Denied(format!("host `{host}` is not allowlisted")))
    }
}

type Inbox = Arc<(Mutex<Vec<(u64, ApiResult<HttpResponse>)>>, Condvar)>;

struct Pending {
    id: u64,
    due: Option<u64>,
    result: Option<ApiResult<HttpResponse>>,
    resolver: Resolver<ApiResult<HttpResponse>>,
}

/// Client-side HTTP state owned by the kernel.
pub struct HttpState {
    pub allowlist: Vec<String>,
    pub timeout_us: u64,
    fixtures: Option<BTreeMap<(Method, String), Fixture>>,
    pending: Vec<Pending>,
    next_id: u64,
    inbox: Inbox,
    notify: Option<Arc<dyn Fn() + Send + Sync>>,
}

impl HttpState {
    pub fn new(allowlist: Vec<String>, timeout_ms: u64) -> Self {
        HttpState {
            allowlist,
            timeout_us: timeout_ms * 1000,
            fixtures: None,
            pending: Vec::new(),
            next_id: 0,
            inbox: Arc::new((Mutex::new(Vec::new()), Condvar::new())),
            notify: None,
        }
    }

    /// Switches to the fixture transport and registers a response.
    pub fn add_fixture(&mut self, method: Method, url: &str, fixture: Fixture) {
        self.fixtures.get_or_insert_with(BTreeMap::new).insert((method, url.to_string()), fixture);
    }

    /// Called from worker threads whenever a real response arrives.
    pub fn set_notifier(&mut self, f: Arc<dyn Fn() + Send + Sync>) {
        self.notify = Some(f);
    }

    pub fn start(
        &mut self,
        method: Method,
        url: &str,
        body: Vec<u8>,
        now: u64,
        resolver: Resolver<ApiResult<HttpResponse>>,
    ) {
        if let Err(e) = allowed(&self.allowlist, url) {
            resolver.resolve(Err(e));
            return;
        }
        let id = self.next_id;
        self.next_id += 1;
        match &self.fixtures {
            Some(fixtures) => {
                let (due, result) = match fixtures.get(&(method, url.to_string())) {
                    Some(f) if f.latency_us > self.timeout_us => (now + self.timeout_us, Err(ApiError::Timeout)),
                    Some(f) => (now + f.latency_us, Ok(f.response.clone())),
                    None => (now, Err(ApiError::Network(format!("no route to `{url}`")))),
                };
                self.pending.push(Pending { id, due: Some(due), result: Some(result), resolver });
            }
            None => {
                self.pending.push(Pending { id, due: None, result: None, resolver });
                let inbox = self.inbox.clone();
                let notify = self.notify.clone();
                let timeout = Duration::from_micros(self.timeout_us);
                let url = url.to_string();
                std::thread::spawn(move || {
                    let result = real_request(method, &url, &body, timeout);
                    let (lock, cv) = &*inbox;
                    lock.lock().expect("http inbox").push((id, result));
                    cv.notify_all();
                    if let Some(n) = notify {
                        n();
                    }
                });
            }
        }
    }

    pub fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }

    /// Whether a request is waiting on a worker thread.
    pub fn has_external(&self) -> bool {
        self.pending.iter().any(|p| p.due.is_none())
    }

    pub fn next_deadline(&self) -> Option<u64> {
        self.pending.iter().filter_map(|p| p.due).min()
    }

    /// Blocks until a worker thread posts a result or `timeout` passes.
    pub fn wait_external(&self, timeout: Duration) {
        let (lock, cv) = &*self.inbox;
        let guard = lock.lock().expect("http inbox");
        if guard.is_empty() {
            let _ = cv.wait_timeout(guard, timeout);
        }
    }

    /// Resolves every request that is due at `now`. Returns whether any was.
    pub fn complete_due(&mut self, now: u64) -> bool {
        let arrived: Vec<_> = std::mem::take(&mut *self.inbox.0.lock().expect("http inbox"));
        for (id, result) in arrived {
            if let Some(p) = self.pending.iter_mut().find(|p| p.id == id) {
                p.result = Some(result);
                p.due = Some(now);
            }
        }
        let mut any = false;
        let mut i = 0;
        while i < self.pending.len() {
            if self.pending[i].due.is_some_and(|d| d <= now) && self.pending[i].result.is_some() {
                let p = self.pending.remove(i);
                p.resolver.resolve(p.result.expect("checked"));
                any = true;
            } else {
                i += 1;
            }
        }
        any
    }
}

fn real_request(method: Method, url: &str, body: &[u8], timeout: Duration) -> ApiResult<HttpResponse> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into();
    let result = match method {
        Method::Get => agent.get(url).call(),
        Method::Post => agent.post(url).send(body),
    };
    let mut resp = result.map_err(|e| match e {
        ureq::Error::Timeout(_) => ApiError::Timeout,
        other => ApiError::Network(other.to_string()),
    })?;
    let headers = resp
        .headers()
        .iter()
        .map(|(k, v)| (k.as_str().to_string(), String::from_utf8_lossy(v.as_bytes()).into_owned()))
        .collect();
    let status = resp.status().as_u16();
    let body = resp
        .body_mut()
        .read_to_vec()
        .map_err(|e| ApiError::Network(e.to_string()))?;
    Ok(HttpResponse { status, headers, body })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::completion;

    #[test]
    fn allowlist_forms() {
        let list: Vec<String> = ["127.0.0.1:8080", "tools.local", "*.example.com"].map(String::from).into();
        assert!(allowed(&list, "http://127.0.0.1:8080/x").is_ok());
        assert!(matches!(allowed(&list, "http://127.0.0.1:9090/x"), Err(ApiError::Denied(_))));
        assert!(allowed(&list, "https://tools.local/a?b").is_ok());
        assert!(allowed(&list, "https://api.example.com/").is_ok());
        assert!(matches!(allowed(&list, "https://example.com.evil/"), Err(ApiError::Denied(_))));
        assert!(matches!(allowed(&[], "http://tools.local/"), Err(ApiError::Denied(_))));
        assert!(matches!(allowed(&list, "ftp://tools.local/"), Err(ApiError::InvalidArgument(_))));
    }

    #[test]
    fn fixture_completes_after_latency_or_times_out() {
        let mut http = HttpState::new(vec!["tool".into()], 1);
        http.add_fixture(Method::Get, "http://tool/a", Fixture::ok("hi", 500));
        http.add_fixture(Method::Get, "http://tool/slow", Fixture::ok("late", 5_000));
        let (r1, mut c1) = completion();
        let (r2, mut c2) = completion();
        http.start(Method::Get, "http://tool/a", Vec::new(), 100, r1);
        http.start(Method::Get, "http://tool/slow", Vec::new(), 100, r2);
        assert_eq!(http.next_deadline(), Some(600));
        assert!(http.complete_due(600));
        assert_eq!(c1.try_take().unwrap().unwrap().body, b"hi");
        assert!(http.complete_due(1100));
        assert_eq!(c2.try_take(), Some(Err(ApiError::Timeout)));
    }
}
