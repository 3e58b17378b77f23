//! Concrete chat gateway: response cache, retries and a bound on
//! concurrent backend calls, over a live HTTP or a fixture-backed mock
//! backend.

mod cache;
mod http;
mod mock;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use oosq_core::gateway::BackendKind;
use oosq_core::{ChatGateway, ChatRequest, ChatResponse, GatewayError};

pub use cache::{cache_key, CacheEntry, ResponseCache};
pub use http::{is_transient_status, HttpBackend};
pub use mock::{MockBackend, MockFixture};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendFailure {
    /// Worth retrying: transport errors, 5xx and 429.
    Transient(String),
    Fatal(GatewayError),
}

pub trait Backend: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn call(&self, req: &ChatRequest) -> Result<String, BackendFailure>;
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn kind(&self) -> BackendKind {
        (**self).kind()
    }

    fn call(&self, req: &ChatRequest) -> Result<String, BackendFailure> {
        (**self).call(req)
    }
}

/// Exponential backoff: retry `i` (0-based) waits `base_delay * 2^i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 3, base_delay: Duration::from_secs(1) }
    }
}

impl RetryPolicy {
    pub fn delay(&self, retry: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(retry)
    }
}

/// Counters observable by callers and tests.
#[derive(Debug, Default)]
pub struct GatewayStats {
    pub backend_calls: AtomicUsize,
    pub cache_hits: AtomicUsize,
    pub retries: AtomicUsize,
    in_flight: AtomicUsize,
    pub peak_in_flight: AtomicUsize,
}

impl GatewayStats {
    pub fn backend_calls(&self) -> usize {
        self.backend_calls.load(Ordering::SeqCst)
    }

    pub fn cache_hits(&self) -> usize {
        self.cache_hits.load(Ordering::SeqCst)
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }
}

/// Counting semaphore for backend calls.
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Slots {
    fn acquire(&self) {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
    }

    fn release(&self) {
        *self.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.cv.notify_one();
    }
}

pub struct Gateway {
    backend: Box<dyn Backend>,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    slots: Slots,
    pub stats: GatewayStats,
}

impl Gateway {
    /// `max_in_flight` bounds concurrent backend calls across all batches.
    pub fn new(backend: Box<dyn Backend>, cache: Option<ResponseCache>, retry: RetryPolicy, max_in_flight: usize) -> Self {
        Gateway {
            backend,
            cache,
            retry,
            slots: Slots { free: Mutex::new(max_in_flight.max(1)), cv: Condvar::new() },
            stats: GatewayStats::default(),
        }
    }

    pub fn backend_kind(&self) -> BackendKind {
        self.backend.kind()
    }

    /// Only live responses are cached; mock fixtures are already
    /// deterministic and must stay authoritative.
    fn cache(&self) -> Option<&ResponseCache> {
        self.cache.as_ref().filter(|_| self.backend.kind() == BackendKind::Live)
    }

    fn call_backend(&self, req: &ChatRequest) -> Result<String, BackendFailure> {
        self.slots.acquire();
        let now = self.stats.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.stats.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        self.stats.backend_calls.fetch_add(1, Ordering::SeqCst);
        let out = self.backend.call(req);
        self.stats.in_flight.fetch_sub(1, Ordering::SeqCst);
        self.slots.release();
        out
    }
}

fn check_request(req: &ChatRequest) -> Result<(), GatewayError> {
    if !(req.temperature.is_finite() && req.temperature >= 0.0) {
        return Err(GatewayError::Rejected(format!("invalid temperature {}", req.temperature)));
    }
    if req.max_tokens == 0 {
        return Err(GatewayError::Rejected("max_tokens must be positive".into()));
    }
    Ok(())
}

impl ChatGateway for Gateway {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        check_request(req)?;
        let started = Instant::now();
        if let Some(entry) = self.cache().and_then(|c| c.get(&cache_key(req))) {
            self.stats.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(ChatResponse { text: entry.text, backend: BackendKind::Cache, latency_ms: 0 });
        }
        let mut attempt = 0u32;
        let text = loop {
            match self.call_backend(req) {
                Ok(text) => break text,
                Err(BackendFailure::Fatal(e)) => return Err(e),
                Err(BackendFailure::Transient(message)) => {
                    if attempt >= self.retry.max_retries {
                        return Err(GatewayError::BackendUnavailable { attempts: attempt + 1, message });
                    }
                    log::warn!("transient backend failure ({message}), retry {} of {}", attempt + 1, self.retry.max_retries);
                    std::thread::sleep(self.retry.delay(attempt));
                    self.stats.retries.fetch_add(1, Ordering::SeqCst);
                    attempt += 1;
                }
            }
        };
        if text.trim().is_empty() {
            return Err(GatewayError::EmptyResponse);
        }
        if let Some(cache) = self.cache() {
            if let Err(e) = cache.put(req, &text) {
                log::warn!("could not write cache entry: {e}");
            }
        }
        Ok(ChatResponse {
            text,
            backend: self.backend.kind(),
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }

    /// Runs up to `parallelism` worker threads; results stay aligned with
    /// `requests`.
    fn complete_batch(&self, requests: &[ChatRequest], parallelism: usize) -> Vec<Result<ChatResponse, GatewayError>> {
        let workers = parallelism.max(1).min(requests.len());
        if workers <= 1 {
            return requests.iter().map(|r| self.complete(r)).collect();
        }
        let next = AtomicUsize::new(0);
        let mut slots: Vec<Option<Result<ChatResponse, GatewayError>>> = vec![None; requests.len()];
        let done: Vec<Vec<(usize, Result<ChatResponse, GatewayError>)>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|_| {
                    s.spawn(|| {
                        let mut local = Vec::new();
                        loop {
                            let i = next.fetch_add(1, Ordering::SeqCst);
                            let Some(req) = requests.get(i) else { break };
                            local.push((i, self.complete(req)));
                        }
                        local
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("gateway worker panicked")).collect()
        });
        for (i, r) in done.into_iter().flatten() {
            slots[i] = Some(r);
        }
        slots.into_iter().map(|r| r.expect("every request completed")).collect()
    }
}
