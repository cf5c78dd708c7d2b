//! Concurrency cap for any backend.

use async_trait::async_trait;
use tokio::sync::Semaphore;

use super::{
    BackendError, EntailmentModel, EntailmentVerdict, GenerationRequest, GenerationResult, LanguageModel,
    LlmRequest, VisionLanguageModel,
};

/// Wraps a backend so that at most `cap` calls are in flight at once.
#[derive(Debug)]
pub struct Throttled<B> {
    inner: B,
    permits: Semaphore,
    cap: usize,
}

impl<B> Throttled<B> {
    pub fn new(inner: B, cap: usize) -> Self {
        let cap = cap.max(1);
        Self {
            inner,
            permits: Semaphore::new(cap),
            cap,
        }
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

#[async_trait]
impl<B: VisionLanguageModel> VisionLanguageModel for Throttled<B> {
    fn backend_id(&self) -> String {
        self.inner.backend_id()
    }

    async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        let _permit = self.permits.acquire().await.expect("semaphore never closed");
        self.inner.generate(req).await
    }

    async fn probe(&self) -> Result<(), BackendError> {
        self.inner.probe().await
    }
}

#[async_trait]
impl<B: EntailmentModel> EntailmentModel for Throttled<B> {
    fn backend_id(&self) -> String {
        self.inner.backend_id()
    }

    async fn entailment(&self, premise: &str, hypothesis: &str) -> Result<EntailmentVerdict, BackendError> {
        let _permit = self.permits.acquire().await.expect("semaphore never closed");
        self.inner.entailment(premise, hypothesis).await
    }

    async fn probe(&self) -> Result<(), BackendError> {
        self.inner.probe().await
    }
}

#[async_trait]
impl<B: LanguageModel> LanguageModel for Throttled<B> {
    fn backend_id(&self) -> String {
        self.inner.backend_id()
    }

    async fn complete(&self, req: &LlmRequest) -> Result<String, BackendError> {
        let _permit = self.permits.acquire().await.expect("semaphore never closed");
        self.inner.complete(req).await
    }

    async fn probe(&self) -> Result<(), BackendError> {
        self.inner.probe().await
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;
    use std::time::Duration;

    use crate::backends::TokenLogprob;

    #[derive(Default)]
    struct Probe {
        in_flight: AtomicUsize,
        peak: AtomicUsize,
    }

    #[async_trait]
    impl VisionLanguageModel for Arc<Probe> {
        fn backend_id(&self) -> String {
            "probe".into()
        }

        async fn generate(&self, _req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
            let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            tokio::time::sleep(Duration::from_millis(5)).await;
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
            GenerationResult::new("ok", vec![TokenLogprob { logprob: -0.1, top: vec![-0.1] }])
        }
    }

    #[tokio::test(flavor = "multi_thread", worker_threads = 4)]
    async fn in_flight_never_exceeds_cap() {
        let probe = Arc::new(Probe::default());
        let throttled = Arc::new(Throttled::new(probe.clone(), 3));
        let tasks: Vec<_> = (0..40)
            .map(|_| {
                let t = throttled.clone();
                tokio::spawn(async move { t.generate(&GenerationRequest::new(None, "q", 1.0)).await })
            })
            .collect();
        for t in tasks {
            t.await.unwrap().unwrap();
        }
        let peak = probe.peak.load(Ordering::SeqCst);
        assert!(peak <= 3, "peak {peak}");
        assert!(peak >= 2, "calls should overlap, peak {peak}");
    }
}
